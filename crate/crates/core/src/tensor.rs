//! Dense channel-major grids used for images, probability maps and
//! feature maps.

use crate::error::{Error, Result};

/// A `channels × height × width` array of `f64`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// RGB frame with intensities in `[0, 1]`.
pub type Image = Grid;

/// Per-pixel class probabilities; channel `k` holds class `k`.
pub type ProbMap = Grid;

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "grid data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial locations.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Grid, alpha: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Checks the probability-map invariant: entries non-negative and each
    /// pixel's class vector summing to one within `tol`.
    pub fn check_probabilities(&self, tol: f64) -> Result<()> {
        let n = self.pixels();
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..self.channels {
                let v = self.data[c * n + p];
                if !(v >= 0.0) {
                    return Err(Error::validation(format!(
                        "probability map has invalid entry {v} at pixel {p}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::validation(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Per-pixel argmax over channels; ties go to the lowest class id.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.pixels();
        (0..n)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.data[p];
                for c in 1..self.channels {
                    let v = self.data[c * n + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect()
    }
}
