//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Everything operates on a single [`Grid`] at a time; batching is a loop in
//! the training engine.

use crate::tensor::Grid;

/// `C = alpha * A·B + beta * C` for row-major operands described by
/// explicit strides, so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let a_span = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let b_span = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!((a_span as usize) < a.len() && (b_span as usize) < b.len());
    // SAFETY: the asserts above bound every index touched through the
    // strides; `c` is a distinct, exclusively borrowed slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel, stride-1, zero-padded ("same") 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out_channels × (in_channels · kernel²)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Cached lowering of the input, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col(&self, x: &Grid) -> Vec<f64> {
        let (c_in, h, w) = x.shape();
        let k = self.kernel;
        if k == 1 {
            return x.data().to_vec();
        }
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; c_in * k * k * hw];
        for c in 0..c_in {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let oy = ky as isize - r;
                    let ox = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                        for xx in x_lo..x_hi {
                            dst_row[xx] = src_row[(xx as isize + ox) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Grid {
        let k = self.kernel;
        let mut out = Grid::zeros(self.in_channels, h, w);
        if k == 1 {
            out.data_mut().copy_from_slice(cols);
            return out;
        }
        let r = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.in_channels {
            let plane = out.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let oy = ky as isize - r;
                    let ox = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                        for xx in x_lo..x_hi {
                            plane[sy as usize * w + (xx as isize + ox) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Grid) -> (Grid, ConvCache) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let cols = self.im2col(x);
        let mut out = Grid::zeros(self.out_channels, h, w);
        for (co, b) in self.bias.iter().enumerate() {
            out.plane_mut(co).iter_mut().for_each(|v| *v = *b);
        }
        let kk = self.fan_in();
        gemm(
            self.out_channels,
            kk,
            hw,
            &self.weight,
            (kk as isize, 1),
            &cols,
            (hw as isize, 1),
            1.0,
            out.data_mut(),
        );
        (
            out,
            ConvCache {
                cols,
                height: h,
                width: w,
            },
        )
    }

    /// Accumulates parameter gradients into `grad_weight`/`grad_bias` and
    /// returns the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Grid,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        need_input: bool,
    ) -> Option<Grid> {
        let hw = cache.height * cache.width;
        let kk = self.fan_in();
        for (co, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.plane(co).iter().sum::<f64>();
        }
        // dW += dY · colsᵀ
        gemm(
            self.out_channels,
            hw,
            kk,
            grad_out.data(),
            (hw as isize, 1),
            &cache.cols,
            (1, hw as isize),
            1.0,
            grad_weight,
        );
        if !need_input {
            return None;
        }
        // dCols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * hw];
        gemm(
            kk,
            self.out_channels,
            hw,
            &self.weight,
            (1, kk as isize),
            grad_out.data(),
            (hw as isize, 1),
            0.0,
            &mut dcols,
        );
        Some(self.col2im(&dcols, cache.height, cache.width))
    }
}

pub fn relu(x: &mut Grid) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` in place by the positive entries of the ReLU output.
pub fn relu_backward(activated: &Grid, grad: &mut Grid) {
    for (g, a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 average pooling; height and width must be even.
pub fn avg_pool2(x: &Grid) -> Grid {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    Grid::from_fn(c, oh, ow, |ch, y, xx| {
        0.25 * (x.at(ch, 2 * y, 2 * xx)
            + x.at(ch, 2 * y, 2 * xx + 1)
            + x.at(ch, 2 * y + 1, 2 * xx)
            + x.at(ch, 2 * y + 1, 2 * xx + 1))
    })
}

pub fn avg_pool2_backward(grad: &Grid) -> Grid {
    let (c, h, w) = grad.shape();
    Grid::from_fn(c, 2 * h, 2 * w, |ch, y, x| 0.25 * grad.at(ch, y / 2, x / 2))
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Grid) -> Grid {
    let (c, h, w) = x.shape();
    Grid::from_fn(c, 2 * h, 2 * w, |ch, y, xx| x.at(ch, y / 2, xx / 2))
}

pub fn upsample2_backward(grad: &Grid) -> Grid {
    let (c, h, w) = grad.shape();
    Grid::from_fn(c, h / 2, w / 2, |ch, y, x| {
        grad.at(ch, 2 * y, 2 * x)
            + grad.at(ch, 2 * y, 2 * x + 1)
            + grad.at(ch, 2 * y + 1, 2 * x)
            + grad.at(ch, 2 * y + 1, 2 * x + 1)
    })
}

/// Channel-wise softmax at every pixel.
pub fn softmax_channels(logits: &Grid) -> Grid {
    let (c, h, w) = logits.shape();
    let n = h * w;
    let mut out = Grid::zeros(c, h, w);
    let src = logits.data();
    let dst = out.data_mut();
    for p in 0..n {
        let max = (0..c)
            .map(|k| src[k * n + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (src[k * n + p] - max).exp();
            dst[k * n + p] = e;
            sum += e;
        }
        for k in 0..c {
            dst[k * n + p] /= sum;
        }
    }
    out
}

/// Maps a gradient w.r.t. softmax probabilities to one w.r.t. logits.
pub fn softmax_backward(probs: &Grid, grad_probs: &Grid) -> Grid {
    let (c, h, w) = probs.shape();
    let n = h * w;
    let q = probs.data();
    let g = grad_probs.data();
    let mut out = Grid::zeros(c, h, w);
    let d = out.data_mut();
    for p in 0..n {
        let dot: f64 = (0..c).map(|k| q[k * n + p] * g[k * n + p]).sum();
        for k in 0..c {
            d[k * n + p] = q[k * n + p] * (g[k * n + p] - dot);
        }
    }
    out
}
