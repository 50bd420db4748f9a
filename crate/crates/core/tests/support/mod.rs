//! Brute-force reference implementations and random fixtures shared by the
//! integration tests. Nothing here calls into the code under test except
//! for plain data constructors and accessors.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tempseg::conv_lstm::ConvLstmParams;
use tempseg::flowwarp::FlowField;
use tempseg::metrics::{LabelMap, IGNORE};
use tempseg::similarity::FeatureGrid;
use tempseg::tensor::Grid;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Grid {
    Grid::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Probabilities bounded away from zero.
pub fn random_probs(rng: &mut impl Rng, k: usize, h: usize, w: usize) -> Grid {
    let mut g = Grid::from_fn(k, h, w, |_, _, _| rng.gen_range(0.2..1.0));
    for p in 0..h * w {
        let s: f64 = (0..k).map(|c| g.plane(c)[p]).sum();
        for c in 0..k {
            g.plane_mut(c)[p] /= s;
        }
    }
    g
}

pub fn random_flow(rng: &mut impl Rng, h: usize, w: usize, max: f64) -> FlowField {
    let dx = (0..h * w).map(|_| rng.gen_range(-max..max)).collect();
    let dy = (0..h * w).map(|_| rng.gen_range(-max..max)).collect();
    FlowField::new(h, w, dx, dy).unwrap()
}

pub fn random_features(rng: &mut impl Rng, n: usize, c: usize) -> FeatureGrid {
    FeatureGrid::new(n, c, (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, k: u8) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()
}

/// Relative error with a small absolute floor on the scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Largest relative error between `grad` and central differences of `f`.
pub fn max_fd_error(x: &[f64], grad: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    (0..x.len())
        .map(|i| rel_err(grad[i], central_diff(x, i, 1e-6, f)))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bilinear backward warp with coordinates clamped into the canvas.
pub fn warp_oracle(src: &Grid, flow: &FlowField) -> Vec<f64> {
    let (c, h, w) = src.shape();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.at(y, x);
                let sx = (x as f64 + dx).max(0.0).min((w - 1) as f64);
                let sy = (y as f64 + dy).max(0.0).min((h - 1) as f64);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (ax, ay) = (sx - x0, sy - y0);
                let px = |xx: f64, yy: f64| {
                    let xi = (xx as usize).min(w - 1);
                    let yi = (yy as usize).min(h - 1);
                    src.at(ch, yi, xi)
                };
                out[(ch * h + y) * w + x] = px(x0, y0) * (1.0 - ax) * (1.0 - ay)
                    + px(x0 + 1.0, y0) * ax * (1.0 - ay)
                    + px(x0, y0 + 1.0) * (1.0 - ax) * ay
                    + px(x0 + 1.0, y0 + 1.0) * ax * ay;
            }
        }
    }
    out
}

/// Cosine similarity of every row pair; zero rows give 0.
pub fn at_oracle(x1: &FeatureGrid, x2: &FeatureGrid) -> Vec<f64> {
    let mut out = Vec::with_capacity(x1.rows() * x2.rows());
    for i in 0..x1.rows() {
        for j in 0..x2.rows() {
            let (a, b) = (x1.row(i), x2.row(j));
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            out.push(if na <= 1e-12 || nb <= 1e-12 {
                0.0
            } else {
                dot(a, b) / (na * nb)
            });
        }
    }
    out
}

/// Per-class IoU from explicit pixel counting; `None` when a class is
/// absent from both prediction and ground truth.
pub fn iou_oracle(preds: &[LabelMap], gts: &[LabelMap], k: usize) -> Vec<Option<f64>> {
    (0..k as u8)
        .map(|c| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (p, g) in preds.iter().zip(gts) {
                for (&pv, &gv) in p.ids().iter().zip(g.ids()) {
                    if gv == IGNORE {
                        continue;
                    }
                    let (a, b) = (pv == c, gv == c);
                    inter += u64::from(a && b);
                    union += u64::from(a || b);
                }
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

pub fn mean_defined(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Nearest-neighbour label warp, written independently.
pub fn warp_labels_oracle(labels: &LabelMap, flow: &FlowField) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut ids = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = ((x as f64 + dx).round() as i64).clamp(0, w as i64 - 1) as usize;
            let sy = ((y as f64 + dy).round() as i64).clamp(0, h as i64 - 1) as usize;
            ids[y * w + x] = labels.at(sy, sx);
        }
    }
    LabelMap::new(h, w, ids).unwrap()
}

/// Mean over pairs of the warped-prediction mIoU.
pub fn tc_oracle(preds: &[LabelMap], flows: &[FlowField], k: usize) -> f64 {
    let scores: Vec<f64> = (0..flows.len())
        .map(|t| {
            let warped = warp_labels_oracle(&preds[t], &flows[t]);
            mean_defined(&iou_oracle(&[warped], &[preds[t + 1].clone()], k))
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One peephole ConvLSTM step with direct convolution loops. Returns the
/// new `(memory, hidden)`.
pub fn lstm_step_oracle(
    p: &ConvLstmParams,
    memory: &Grid,
    hidden: &Grid,
    input: &Grid,
) -> (Grid, Grid) {
    let (hc, h, w) = memory.shape();
    let k = p.kernel();
    let r = (k / 2) as i64;
    let cin = 1 + hc;
    let x_at = |ci: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else if ci == 0 {
            input.at(0, y as usize, x as usize)
        } else {
            hidden.at(ci - 1, y as usize, x as usize)
        }
    };
    let pre = |gate: usize, c: usize, y: usize, x: usize| -> f64 {
        let co = gate * hc + c;
        let mut s = p.conv.bias[co];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = p.conv.weight[co * cin * k * k + (ci * k + ky) * k + kx];
                    s += wv * x_at(ci, y as i64 + ky as i64 - r, x as i64 + kx as i64 - r);
                }
            }
        }
        s
    };
    let mut e_out = Grid::zeros(hc, h, w);
    let mut h_out = Grid::zeros(hc, h, w);
    for c in 0..hc {
        for y in 0..h {
            for x in 0..w {
                let prev = memory.at(c, y, x);
                let i = sigmoid(pre(0, c, y, x) + p.peep_i[c] * prev);
                let f = sigmoid(pre(1, c, y, x) + p.peep_f[c] * prev);
                let g = pre(2, c, y, x).tanh();
                let e = f * prev + i * g;
                let o = sigmoid(pre(3, c, y, x) + p.peep_o[c] * e);
                *e_out.at_mut(c, y, x) = e;
                *h_out.at_mut(c, y, x) = o * e.tanh();
            }
        }
    }
    (e_out, h_out)
}
