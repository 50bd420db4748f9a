//! Backward warping along optical flow, and the photometric occlusion mask.
//!
//! A [`FlowField`] `M_{t→s}` stores, for every pixel `i` of frame `t`, the
//! displacement `δi` such that the pixel appears at `i + δi` in frame `s`.
//! Warping a map of frame `s` backward along it yields a map aligned with
//! frame `t`. Fractional positions are sampled bilinearly and positions that
//! fall outside the frame are clamped to the border.

mod flo;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};

use crate::error::{ensure_same_shape, Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::{Grid, Image};

/// Dense per-pixel displacement field, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if dx.len() != n || dy.len() != n {
            return Err(Error::contract(format!(
                "flow components have {}/{} entries, expected {n}",
                dx.len(),
                dy.len()
            )));
        }
        if let Some(bad) = dx.iter().chain(&dy).find(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "flow contains non-finite value {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            dx,
            dy,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            dx: vec![dx; n],
            dy: vec![dy; n],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    /// Chains `self = M_{a→b}` with `next = M_{b→c}` into `M_{a→c}`:
    /// each pixel's displacement is extended by `next` sampled where the
    /// pixel lands in frame `b`.
    pub fn then(&self, next: &FlowField) -> Result<FlowField> {
        if (self.height, self.width) != (next.height, next.width) {
            return Err(Error::contract("chained flows differ in shape"));
        }
        let mut dx = Vec::with_capacity(self.dx.len());
        let mut dy = Vec::with_capacity(self.dy.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (ux, uy) = self.at(y, x);
                let taps = bilinear_taps(x as f64 + ux, y as f64 + uy, self.height, self.width);
                let (mut vx, mut vy) = (0.0, 0.0);
                for (idx, w) in taps {
                    vx += w * next.dx[idx];
                    vy += w * next.dy[idx];
                }
                dx.push(ux + vx);
                dy.push(uy + vy);
            }
        }
        FlowField::new(self.height, self.width, dx, dy)
    }
}

/// Per-pixel weights `v = exp(-d)`, `d ≥ 0`, hence `0 < v ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl OcclusionMask {
    /// Builds a mask from raw weights. Zero weights are accepted so that a
    /// fully occluded pair can be expressed directly.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::contract("mask size does not match its shape"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::validation(format!("mask weight {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Bilinear taps for sampling at `(sx, sy)` with border clamping. Returns
/// four `(flat index, weight)` pairs whose weights sum to one.
#[inline]
pub(crate) fn bilinear_taps(sx: f64, sy: f64, height: usize, width: usize) -> [(usize, f64); 4] {
    let sx = sx.clamp(0.0, (width - 1) as f64);
    let sy = sy.clamp(0.0, (height - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

fn check_flow_for(src: &Grid, flow: &FlowField) -> Result<()> {
    if (src.height(), src.width()) != (flow.height, flow.width) {
        return Err(Error::contract(format!(
            "map is {}x{} but flow is {}x{}",
            src.height(),
            src.width(),
            flow.height,
            flow.width
        )));
    }
    if !flow.is_finite() {
        return Err(Error::validation("flow contains non-finite displacements"));
    }
    Ok(())
}

fn sampling_plan(flow: &FlowField) -> Vec<[(usize, f64); 4]> {
    let mut plan = Vec::with_capacity(flow.height * flow.width);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (dx, dy) = flow.at(y, x);
            plan.push(bilinear_taps(
                x as f64 + dx,
                y as f64 + dy,
                flow.height,
                flow.width,
            ));
        }
    }
    plan
}

/// Samples every channel of `src` (a map of frame `t+k`) at `x + δ(x)`,
/// producing a map aligned with frame `t`.
pub fn warp_backward(src: &Grid, flow: &FlowField) -> Result<Grid> {
    check_flow_for(src, flow)?;
    let plan = sampling_plan(flow);
    let mut out = Grid::zeros(src.channels(), src.height(), src.width());
    for c in 0..src.channels() {
        let s = src.plane(c);
        let o = out.plane_mut(c);
        for (p, taps) in plan.iter().enumerate() {
            o[p] = taps[0].1 * s[taps[0].0]
                + taps[1].1 * s[taps[1].0]
                + taps[2].1 * s[taps[2].0]
                + taps[3].1 * s[taps[3].0];
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`warp_backward`] with respect to `src`.
/// The flow is treated as a constant.
pub fn warp_backward_vjp(grad_out: &Grid, flow: &FlowField) -> Result<Grid> {
    check_flow_for(grad_out, flow)?;
    let plan = sampling_plan(flow);
    let mut grad_src = Grid::zeros(grad_out.channels(), grad_out.height(), grad_out.width());
    for c in 0..grad_out.channels() {
        let g = grad_out.plane(c);
        let d = grad_src.plane_mut(c);
        for (p, taps) in plan.iter().enumerate() {
            for &(idx, w) in taps {
                d[idx] += w * g[p];
            }
        }
    }
    Ok(grad_src)
}

/// Warps a hard label map with nearest-neighbour sampling and border clamp.
pub fn warp_labels_nearest(labels: &LabelMap, flow: &FlowField) -> Result<LabelMap> {
    if (labels.height(), labels.width()) != (flow.height, flow.width) {
        return Err(Error::contract("label map and flow differ in shape"));
    }
    if !flow.is_finite() {
        return Err(Error::validation("flow contains non-finite displacements"));
    }
    let (h, w) = (flow.height, flow.width);
    let src = labels.ids();
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = (x as f64 + dx).round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = (y as f64 + dy).round().clamp(0.0, (h - 1) as f64) as usize;
            ids.push(src[sy * w + sx]);
        }
    }
    LabelMap::new(h, w, ids)
}

/// `v = exp(-mean_c |I_t - Î_{t+k}|)` per pixel.
pub fn occlusion_mask(frame_t: &Image, warped_frame: &Image) -> Result<OcclusionMask> {
    ensure_same_shape("occlusion mask", frame_t.shape(), warped_frame.shape())?;
    let channels = frame_t.channels();
    if channels == 0 {
        return Err(Error::contract("occlusion mask needs at least one channel"));
    }
    let n = frame_t.pixels();
    let mut values = vec![0.0; n];
    for c in 0..channels {
        for ((v, a), b) in values
            .iter_mut()
            .zip(frame_t.plane(c))
            .zip(warped_frame.plane(c))
        {
            *v += (a - b).abs();
        }
    }
    for v in &mut values {
        *v = (-*v / channels as f64).exp();
    }
    OcclusionMask::new(frame_t.height(), frame_t.width(), values)
}
