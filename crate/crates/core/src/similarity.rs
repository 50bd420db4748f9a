//! Pairwise cosine-similarity maps between pooled feature grids.
//!
//! Every similarity map in the crate (pair-wise distillation, pair-wise
//! frame distillation, the recurrent encoder input) is built on grids
//! average-pooled to a fixed resolution, which bounds the `N²` size of the
//! maps independently of the frame resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gemm;
use crate::tensor::Grid;

/// Rows with a Euclidean norm at or below this value are treated as zero.
const ZERO_NORM: f64 = 1e-12;

/// Pooled resolution `height × width` of a feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSize {
    pub height: usize,
    pub width: usize,
}

impl PoolSize {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// `N × C` matrix: one row per spatial location, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::contract(format!(
                "feature grid has {} values, expected {rows}x{cols}",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Number of locations `N`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of channels `C`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// `N₁ × N₂` matrix of cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::contract(
                "similarity map size does not match its shape",
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// The map as a one-channel image, the recurrent encoder's input.
    pub fn to_grid(&self) -> Grid {
        Grid::new(1, self.rows, self.cols, self.values.clone()).expect("sizes agree")
    }
}

fn bin_bounds(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    (i * extent / bins, ((i + 1) * extent).div_ceil(bins))
}

/// Adaptive average pooling of a `C × h × w` map to `target`, flattened
/// row-major into an `N × C` grid.
pub fn pool_to_grid(map: &Grid, target: PoolSize) -> Result<FeatureGrid> {
    let (c, h, w) = map.shape();
    if target.height == 0 || target.width == 0 {
        return Err(Error::validation("pool target must be non-empty"));
    }
    if target.height > h || target.width > w {
        return Err(Error::validation(format!(
            "pool target {}x{} exceeds input {h}x{w}",
            target.height, target.width
        )));
    }
    let n = target.locations();
    let mut values = vec![0.0; n * c];
    for ty in 0..target.height {
        let (y0, y1) = bin_bounds(ty, target.height, h);
        for tx in 0..target.width {
            let (x0, x1) = bin_bounds(tx, target.width, w);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let row = ty * target.width + tx;
            for ch in 0..c {
                let plane = map.plane(ch);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                values[row * c + ch] = acc * inv;
            }
        }
    }
    FeatureGrid::new(n, c, values)
}

/// Vector-Jacobian product of [`pool_to_grid`].
pub fn pool_to_grid_vjp(
    grad: &FeatureGrid,
    input_shape: (usize, usize, usize),
    target: PoolSize,
) -> Result<Grid> {
    let (c, h, w) = input_shape;
    if grad.rows != target.locations() || grad.cols != c {
        return Err(Error::contract(
            "pooled gradient does not match the pool target",
        ));
    }
    let mut out = Grid::zeros(c, h, w);
    for ty in 0..target.height {
        let (y0, y1) = bin_bounds(ty, target.height, h);
        for tx in 0..target.width {
            let (x0, x1) = bin_bounds(tx, target.width, w);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let row = ty * target.width + tx;
            for ch in 0..c {
                let g = grad.values[row * c + ch] * inv;
                let plane = out.plane_mut(ch);
                for y in y0..y1 {
                    plane[y * w + x0..y * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += g);
                }
            }
        }
    }
    Ok(out)
}

/// Row-normalises `x`; returns unit rows (zero rows stay zero) and norms.
fn normalize_rows(x: &FeatureGrid) -> (Vec<f64>, Vec<f64>) {
    let mut unit = x.values.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for row in unit.chunks_exact_mut(x.cols.max(1)).take(x.rows) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > ZERO_NORM {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        norms.push(norm);
    }
    (unit, norms)
}

/// `a_ij = x1_i·x2_j / (‖x1_i‖‖x2_j‖)`; a zero row yields similarity 0.
pub fn at_operator(x1: &FeatureGrid, x2: &FeatureGrid) -> Result<SimilarityMap> {
    if x1.cols != x2.cols {
        return Err(Error::contract(format!(
            "AT operator inputs have {} and {} channels",
            x1.cols, x2.cols
        )));
    }
    let (u1, _) = normalize_rows(x1);
    let (u2, _) = normalize_rows(x2);
    let c = x1.cols as isize;
    let mut values = vec![0.0; x1.rows * x2.rows];
    gemm(
        x1.rows,
        x1.cols,
        x2.rows,
        &u1,
        (c, 1),
        &u2,
        (1, c),
        0.0,
        &mut values,
    );
    SimilarityMap::new(x1.rows, x2.rows, values)
}

fn unit_vjp(du: &mut [f64], unit: &[f64], norms: &[f64], cols: usize) {
    for ((d, u), &norm) in du
        .chunks_exact_mut(cols)
        .zip(unit.chunks_exact(cols))
        .zip(norms)
    {
        if norm > ZERO_NORM {
            let dot: f64 = d.iter().zip(u).map(|(a, b)| a * b).sum();
            d.iter_mut()
                .zip(u)
                .for_each(|(dv, uv)| *dv = (*dv - uv * dot) / norm);
        } else {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Vector-Jacobian product of [`at_operator`] w.r.t. both inputs.
pub fn at_operator_vjp(
    x1: &FeatureGrid,
    x2: &FeatureGrid,
    grad: &SimilarityMap,
) -> Result<(FeatureGrid, FeatureGrid)> {
    if x1.cols != x2.cols {
        return Err(Error::contract("AT operator inputs differ in channels"));
    }
    if grad.rows != x1.rows || grad.cols != x2.rows {
        return Err(Error::contract("similarity gradient has the wrong shape"));
    }
    let (u1, n1) = normalize_rows(x1);
    let (u2, n2) = normalize_rows(x2);
    let (r1, r2, c) = (x1.rows, x2.rows, x1.cols);
    let mut du1 = vec![0.0; r1 * c];
    let mut du2 = vec![0.0; r2 * c];
    // dU1 = G·U2, dU2 = Gᵀ·U1
    gemm(
        r1,
        r2,
        c,
        &grad.values,
        (r2 as isize, 1),
        &u2,
        (c as isize, 1),
        0.0,
        &mut du1,
    );
    gemm(
        r2,
        r1,
        c,
        &grad.values,
        (1, r2 as isize),
        &u1,
        (c as isize, 1),
        0.0,
        &mut du2,
    );
    if c > 0 {
        unit_vjp(&mut du1, &u1, &n1, c);
        unit_vjp(&mut du2, &u2, &n2, c);
    }
    Ok((FeatureGrid::new(r1, c, du1)?, FeatureGrid::new(r2, c, du2)?))
}

/// Self-similarity `at_operator(x, x)` and its vector-Jacobian product.
pub fn self_similarity(x: &FeatureGrid) -> SimilarityMap {
    at_operator(x, x).expect("a grid always matches itself")
}

pub fn self_similarity_vjp(x: &FeatureGrid, grad: &SimilarityMap) -> Result<FeatureGrid> {
    let (mut a, b) = at_operator_vjp(x, x, grad)?;
    a.values
        .iter_mut()
        .zip(&b.values)
        .for_each(|(p, q)| *p += q);
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize, v: &[f64]) -> FeatureGrid {
        FeatureGrid::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let x = grid(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(at_operator(&x, &x).unwrap().values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn diagonal_direction() {
        let a = at_operator(&grid(1, 2, &[1.0, 0.0]), &grid(1, 2, &[1.0, 1.0])).unwrap();
        assert!((a.at(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn zero_row_has_zero_similarity_and_gradient() {
        let x1 = grid(2, 2, &[0.0, 0.0, 1.0, 2.0]);
        let x2 = grid(1, 2, &[3.0, 1.0]);
        let a = at_operator(&x1, &x2).unwrap();
        assert_eq!(a.at(0, 0), 0.0);
        let g = SimilarityMap::new(2, 1, vec![1.0, 1.0]).unwrap();
        let (d1, _) = at_operator_vjp(&x1, &x2, &g).unwrap();
        assert_eq!(d1.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let err = at_operator(&grid(1, 2, &[1.0, 0.0]), &grid(1, 3, &[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn pooling_constant_map() {
        let g = pool_to_grid(&Grid::filled(1, 4, 4, 0.7), PoolSize::new(2, 2)).unwrap();
        assert_eq!(g.values(), &[0.7; 4]);
    }

    #[test]
    fn pooling_to_single_cell_is_mean() {
        let m = Grid::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = pool_to_grid(&m, PoolSize::new(1, 1)).unwrap();
        assert_eq!(g.values(), &[2.5]);
    }

    #[test]
    fn pooling_to_input_size_is_reshape() {
        let m = Grid::from_fn(2, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f64);
        let g = pool_to_grid(&m, PoolSize::new(3, 3)).unwrap();
        for i in 0..9 {
            assert_eq!(g.row(i), &[i as f64, (9 + i) as f64]);
        }
    }

    #[test]
    fn oversized_pool_target_is_rejected() {
        let err = pool_to_grid(&Grid::zeros(1, 2, 2), PoolSize::new(3, 1)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn pooling_vjp_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Grid::from_fn(2, 7, 5, |_, _, _| rng.gen());
        let target = PoolSize::new(3, 2);
        let p = pool_to_grid(&m, target).unwrap();
        let g = FeatureGrid::new(6, 2, (0..12).map(|_| rng.gen()).collect()).unwrap();
        let back = pool_to_grid_vjp(&g, m.shape(), target).unwrap();
        let lhs: f64 = p.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = m.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn self_similarity_is_symmetric_with_unit_diagonal(
            vals in proptest::collection::vec(0.05f64..2.0, 15)
        ) {
            let x = grid(5, 3, &vals);
            let a = self_similarity(&x);
            for i in 0..5 {
                prop_assert!((a.at(i, i) - 1.0).abs() < 1e-12);
                for j in 0..5 {
                    prop_assert!((a.at(i, j) - a.at(j, i)).abs() < 1e-14);
                    prop_assert!(a.at(i, j).abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn positive_rescaling_leaves_map_unchanged(
            vals in proptest::collection::vec(-2.0f64..2.0, 12),
            scale in 0.01f64..100.0
        ) {
            let x1 = grid(4, 3, &vals);
            let scaled: Vec<f64> = vals.iter().map(|v| v * scale).collect();
            let x2 = grid(4, 3, &vals[..].iter().rev().copied().collect::<Vec<_>>());
            let a = at_operator(&x1, &x2).unwrap();
            let b = at_operator(&grid(4, 3, &scaled), &x2).unwrap();
            for (p, q) in a.values().iter().zip(b.values()) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
    }
}
