//! Training objectives and their gradients.
//!
//! Every loss comes in two forms: a value-only function and a `*_vjp`
//! variant returning the value together with gradients w.r.t. the student
//! side inputs. Teacher outputs and flow fields are always constants.

use serde::{Deserialize, Serialize};

use crate::conv_lstm::{encode_sequence, encode_sequence_vjp, ConvLstmParams, Embedding};
use crate::error::{ensure_same_shape, Error, Result};
use crate::flowwarp::{occlusion_mask, warp_backward, warp_backward_vjp, FlowField, OcclusionMask};
use crate::metrics::{LabelMap, IGNORE};
use crate::models::NetOutput;
use crate::similarity::{
    at_operator, at_operator_vjp, pool_to_grid, pool_to_grid_vjp, self_similarity,
    self_similarity_vjp, FeatureGrid, PoolSize, SimilarityMap,
};
use crate::tensor::{Grid, Image, ProbMap};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-8;

fn check_mask(q: &Grid, mask: &OcclusionMask) -> Result<()> {
    if (mask.height(), mask.width()) != (q.height(), q.width()) {
        return Err(Error::contract(
            "occlusion mask and probability map differ in shape",
        ));
    }
    Ok(())
}

/// Occlusion-weighted squared distance between `q_t` and `q_tk` warped
/// back to frame `t`, averaged over pixels.
pub fn temporal_loss(
    q_t: &ProbMap,
    q_tk: &ProbMap,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<f64> {
    temporal_loss_vjp(q_t, q_tk, flow, mask).map(|(v, _, _)| v)
}

/// [`temporal_loss`] with gradients w.r.t. `q_t` and `q_tk`.
pub fn temporal_loss_vjp(
    q_t: &ProbMap,
    q_tk: &ProbMap,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<(f64, Grid, Grid)> {
    ensure_same_shape("temporal loss", q_t.shape(), q_tk.shape())?;
    check_mask(q_t, mask)?;
    let warped = warp_backward(q_tk, flow)?;
    let (k, h, w) = q_t.shape();
    let n = h * w;
    let v = mask.values();
    let mut value = 0.0;
    let mut grad_t = Grid::zeros(k, h, w);
    for c in 0..k {
        let a = q_t.plane(c);
        let b = warped.plane(c);
        let g = grad_t.plane_mut(c);
        for p in 0..n {
            let d = a[p] - b[p];
            value += v[p] * d * d;
            g[p] = 2.0 * v[p] * d / n as f64;
        }
    }
    let mut grad_warped = grad_t.clone();
    grad_warped.scale(-1.0);
    let grad_tk = warp_backward_vjp(&grad_warped, flow)?;
    Ok((value / n as f64, grad_t, grad_tk))
}

fn mean_sq_diff_vjp(s: &SimilarityMap, t: &SimilarityMap) -> Result<(f64, SimilarityMap)> {
    if (s.rows(), s.cols()) != (t.rows(), t.cols()) {
        return Err(Error::contract("similarity maps differ in shape"));
    }
    let n = s.values().len().max(1) as f64;
    let mut value = 0.0;
    let grad: Vec<f64> = s
        .values()
        .iter()
        .zip(t.values())
        .map(|(a, b)| {
            let d = a - b;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((value / n, SimilarityMap::new(s.rows(), s.cols(), grad)?))
}

/// Pair-wise-frame distillation: mean squared difference between the
/// student and teacher cross-frame similarity maps of pooled predictions.
pub fn pf_loss(
    qs_t: &ProbMap,
    qs_tk: &ProbMap,
    qt_t: &ProbMap,
    qt_tk: &ProbMap,
    pool: PoolSize,
) -> Result<f64> {
    pf_loss_vjp(qs_t, qs_tk, qt_t, qt_tk, pool).map(|(v, _, _)| v)
}

/// [`pf_loss`] with gradients w.r.t. the two student maps.
pub fn pf_loss_vjp(
    qs_t: &ProbMap,
    qs_tk: &ProbMap,
    qt_t: &ProbMap,
    qt_tk: &ProbMap,
    pool: PoolSize,
) -> Result<(f64, Grid, Grid)> {
    for other in [qs_tk, qt_t, qt_tk] {
        ensure_same_shape("pair-wise frame loss", qs_t.shape(), other.shape())?;
    }
    let s1 = pool_to_grid(qs_t, pool)?;
    let s2 = pool_to_grid(qs_tk, pool)?;
    let student = at_operator(&s1, &s2)?;
    let teacher = at_operator(&pool_to_grid(qt_t, pool)?, &pool_to_grid(qt_tk, pool)?)?;
    let (value, grad) = mean_sq_diff_vjp(&student, &teacher)?;
    let (g1, g2) = at_operator_vjp(&s1, &s2, &grad)?;
    Ok((
        value,
        pool_to_grid_vjp(&g1, qs_t.shape(), pool)?,
        pool_to_grid_vjp(&g2, qs_tk.shape(), pool)?,
    ))
}

/// Squared Euclidean distance between teacher and student embeddings.
pub fn mf_loss(teacher: &Embedding, student: &Embedding) -> Result<f64> {
    mf_loss_vjp(teacher, student).map(|(v, _, _)| v)
}

/// [`mf_loss`] with gradients w.r.t. the teacher and student embeddings.
pub fn mf_loss_vjp(teacher: &Embedding, student: &Embedding) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::contract(format!(
            "embeddings have lengths {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    let diff: Vec<f64> = teacher
        .0
        .iter()
        .zip(&student.0)
        .map(|(t, s)| t - s)
        .collect();
    let value = diff.iter().map(|d| d * d).sum();
    let grad_t = diff.iter().map(|d| 2.0 * d).collect();
    let grad_s = diff.iter().map(|d| -2.0 * d).collect();
    Ok((value, grad_t, grad_s))
}

/// Mean over pixels of `KL(student ‖ teacher)`.
pub fn pixel_distill(qs: &ProbMap, qt: &ProbMap) -> Result<f64> {
    pixel_distill_vjp(qs, qt).map(|(v, _)| v)
}

/// [`pixel_distill`] with the gradient w.r.t. the student map.
pub fn pixel_distill_vjp(qs: &ProbMap, qt: &ProbMap) -> Result<(f64, Grid)> {
    ensure_same_shape("pixel distillation", qs.shape(), qt.shape())?;
    let n = qs.pixels() as f64;
    let mut value = 0.0;
    let mut grad = Grid::zeros(qs.channels(), qs.height(), qs.width());
    for ((g, &s), &t) in grad.data_mut().iter_mut().zip(qs.data()).zip(qt.data()) {
        let log_ratio = s.max(PROB_EPS).ln() - t.max(PROB_EPS).ln();
        value += s * log_ratio;
        *g = (log_ratio + if s > PROB_EPS { 1.0 } else { 0.0 }) / n;
    }
    Ok((value / n, grad))
}

/// Mean squared difference between student and teacher self-similarity
/// maps. The grids must have the same number of locations; channel counts
/// may differ.
pub fn pairwise_distill(fs: &FeatureGrid, ft: &FeatureGrid) -> Result<f64> {
    pairwise_distill_vjp(fs, ft).map(|(v, _)| v)
}

pub fn pairwise_distill_vjp(fs: &FeatureGrid, ft: &FeatureGrid) -> Result<(f64, FeatureGrid)> {
    if fs.rows() != ft.rows() {
        return Err(Error::contract(format!(
            "pair-wise distillation on {} vs {} locations",
            fs.rows(),
            ft.rows()
        )));
    }
    let (value, grad) = mean_sq_diff_vjp(&self_similarity(fs), &self_similarity(ft))?;
    Ok((value, self_similarity_vjp(fs, &grad)?))
}

/// Single-frame distillation: pixel-wise KL plus pair-wise similarity.
pub fn sf_loss(qs: &ProbMap, qt: &ProbMap, fs: &FeatureGrid, ft: &FeatureGrid) -> Result<f64> {
    Ok(pixel_distill(qs, qt)? + pairwise_distill(fs, ft)?)
}

/// Mean negative log-likelihood of the labelled class over non-ignored
/// pixels; zero when every pixel is ignored.
pub fn cross_entropy(q: &ProbMap, labels: &LabelMap) -> Result<f64> {
    cross_entropy_vjp(q, labels).map(|(v, _)| v)
}

pub fn cross_entropy_vjp(q: &ProbMap, labels: &LabelMap) -> Result<(f64, Grid)> {
    if (labels.height(), labels.width()) != (q.height(), q.width()) {
        return Err(Error::contract("labels and probabilities differ in shape"));
    }
    labels.validate(q.channels())?;
    let n = q.pixels();
    let count = labels.ids().iter().filter(|&&id| id != IGNORE).count();
    let mut grad = Grid::zeros(q.channels(), q.height(), q.width());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    let data = q.data();
    let g = grad.data_mut();
    for (p, &id) in labels.ids().iter().enumerate() {
        if id == IGNORE {
            continue;
        }
        let idx = id as usize * n + p;
        let prob = data[idx];
        value -= prob.max(PROB_EPS).ln();
        if prob > PROB_EPS {
            g[idx] = -1.0 / (prob * count as f64);
        }
    }
    Ok((value / count as f64, grad))
}

/// Hinge `max(0, margin - ‖E‖)` pushing the teacher embedding away from
/// the all-zero collapse point. At `E = 0` the norm's subgradient is taken
/// along the normalised all-ones direction.
pub fn anti_collapse_vjp(embedding: &Embedding, margin: f64) -> (f64, Vec<f64>) {
    let norm = embedding.norm();
    let d = embedding.len();
    if norm >= margin || d == 0 {
        return (0.0, vec![0.0; d]);
    }
    let grad = if norm > 0.0 {
        embedding.0.iter().map(|v| -v / norm).collect()
    } else {
        vec![-1.0 / (d as f64).sqrt(); d]
    };
    (margin - norm, grad)
}

/// Which regularisers take part in the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub sf: bool,
    pub pf: bool,
    pub mf: bool,
    pub tl: bool,
}

impl TermFlags {
    pub const NONE: TermFlags = TermFlags {
        sf: false,
        pf: false,
        mf: false,
        tl: false,
    };
    pub const ALL: TermFlags = TermFlags {
        sf: true,
        pf: true,
        mf: true,
        tl: true,
    };

    pub fn needs_teacher(&self) -> bool {
        self.sf || self.pf || self.mf
    }

    /// Whether any term looks beyond the labelled frame.
    pub fn needs_sequence(&self) -> bool {
        self.needs_teacher() || self.tl
    }

    /// Parses `none`, `all`, or a comma list of `sf,pf,mf,tl`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "none" | "" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut flags = Self::NONE;
        for part in s.split(',').map(str::trim) {
            match part {
                "sf" => flags.sf = true,
                "pf" => flags.pf = true,
                "mf" => flags.mf = true,
                "tl" => flags.tl = true,
                other => {
                    return Err(Error::validation(format!(
                        "unknown loss term '{other}' (expected sf, pf, mf, tl, none or all)"
                    )))
                }
            }
        }
        Ok(flags)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.sf, "sf"),
            (self.pf, "pf"),
            (self.mf, "mf"),
            (self.tl, "tl"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join(",")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub terms: TermFlags,
    pub pool: PoolSize,
    /// Margin of the anti-collapse hinge; `None` disables it.
    pub collapse_margin: Option<f64>,
}

/// Scalar terms of one sequence objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sf_pixel: f64,
    pub sf_pair: f64,
    pub tl: f64,
    pub pf: f64,
    pub mf: f64,
    pub anti_collapse: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn sf(&self) -> f64 {
        self.sf_pixel + self.sf_pair
    }

    /// `ce + λ·(sf + tl + pf + mf) + anti_collapse`.
    pub fn recompose(&self) -> f64 {
        self.ce + self.lambda * (self.sf() + self.tl + self.pf + self.mf) + self.anti_collapse
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ce,
            self.sf_pixel,
            self.sf_pair,
            self.tl,
            self.pf,
            self.mf,
            self.anti_collapse,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns sharing one `lambda`.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown {
            lambda: items.first().map(|b| b.lambda).unwrap_or(0.0),
            ..Default::default()
        };
        for b in items {
            out.ce += b.ce / n;
            out.sf_pixel += b.sf_pixel / n;
            out.sf_pair += b.sf_pair / n;
            out.tl += b.tl / n;
            out.pf += b.pf / n;
            out.mf += b.mf / n;
            out.anti_collapse += b.anti_collapse / n;
            out.total += b.total / n;
        }
        out
    }
}

/// One sampled training sequence with the network outputs on every frame.
pub struct SequenceInputs<'a> {
    pub frames: &'a [Image],
    /// `flows[t] = M_{t→t+1}` between consecutive sequence members.
    pub flows: &'a [FlowField],
    pub labels: &'a [Option<LabelMap>],
    pub student: &'a [NetOutput],
    pub teacher: Option<&'a [NetOutput]>,
}

/// Gradients of the total objective.
pub struct ObjectiveGradients {
    /// w.r.t. the student probabilities of each frame.
    pub probs: Vec<Grid>,
    /// w.r.t. the student features of each frame, when any term used them.
    pub features: Vec<Option<Grid>>,
    /// w.r.t. the shared ConvLSTM parameters, when MF is active.
    pub lstm: Option<ConvLstmParams>,
    /// Final teacher embedding, when MF is active.
    pub teacher_embedding: Option<Embedding>,
}

fn add_into(slot: &mut Option<Grid>, grad: &Grid, alpha: f64) {
    match slot {
        Some(g) => g.add_scaled(grad, alpha),
        None => {
            let mut g = grad.clone();
            g.scale(alpha);
            *slot = Some(g);
        }
    }
}

/// Composite sequence objective
/// `Σ ce + λ(Σ sf + Σ tl + Σ pf + mf) + anti_collapse`, with gradients.
///
/// Cross-entropy runs on every labelled frame, single-frame distillation
/// on every frame, temporal and pair-wise-frame terms on each consecutive
/// pair, and the multi-frame term once per sequence.
pub fn total_objective(
    seq: &SequenceInputs<'_>,
    cfg: &ObjectiveConfig,
    lstm: Option<&ConvLstmParams>,
) -> Result<(LossBreakdown, ObjectiveGradients)> {
    let t_len = seq.student.len();
    if t_len == 0 {
        return Err(Error::validation("objective needs at least one frame"));
    }
    if seq.frames.len() != t_len || seq.labels.len() != t_len {
        return Err(Error::contract(
            "frames, labels and outputs differ in length",
        ));
    }
    if seq.flows.len() + 1 != t_len {
        return Err(Error::contract(format!(
            "{} flows for a {t_len}-frame sequence",
            seq.flows.len()
        )));
    }
    if !seq.labels.iter().any(Option::is_some) {
        return Err(Error::validation("sequence has no labelled frame"));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::validation(format!(
            "lambda {} must be non-negative",
            cfg.lambda
        )));
    }
    let terms = cfg.terms;
    let teacher = if terms.needs_teacher() {
        let t = seq
            .teacher
            .ok_or_else(|| Error::validation("distillation terms need teacher outputs"))?;
        if t.len() != t_len {
            return Err(Error::contract("teacher outputs do not cover the sequence"));
        }
        Some(t)
    } else {
        None
    };
    let lambda = cfg.lambda;
    let mut b = LossBreakdown {
        lambda,
        ..Default::default()
    };
    let mut d_probs: Vec<Grid> = seq
        .student
        .iter()
        .map(|o| Grid::zeros(o.probs.channels(), o.probs.height(), o.probs.width()))
        .collect();
    let mut d_feats: Vec<Option<Grid>> = vec![None; t_len];

    for (t, labels) in seq.labels.iter().enumerate() {
        if let Some(labels) = labels {
            let (v, g) = cross_entropy_vjp(&seq.student[t].probs, labels)?;
            b.ce += v;
            d_probs[t].add_scaled(&g, 1.0);
        }
    }

    if let (true, Some(teacher)) = (terms.sf, teacher) {
        for t in 0..t_len {
            let (s, tt) = (&seq.student[t], &teacher[t]);
            let (v, g) = pixel_distill_vjp(&s.probs, &tt.probs)?;
            b.sf_pixel += v;
            d_probs[t].add_scaled(&g, lambda);
            let fs = pool_to_grid(&s.features, cfg.pool)?;
            let ft = pool_to_grid(&tt.features, cfg.pool)?;
            let (v, g) = pairwise_distill_vjp(&fs, &ft)?;
            b.sf_pair += v;
            add_into(
                &mut d_feats[t],
                &pool_to_grid_vjp(&g, s.features.shape(), cfg.pool)?,
                lambda,
            );
        }
    }

    if terms.tl {
        for t in 0..t_len - 1 {
            let flow = &seq.flows[t];
            let warped = warp_backward(&seq.frames[t + 1], flow)?;
            let mask = occlusion_mask(&seq.frames[t], &warped)?;
            let (v, ga, gb) = temporal_loss_vjp(
                &seq.student[t].probs,
                &seq.student[t + 1].probs,
                flow,
                &mask,
            )?;
            b.tl += v;
            d_probs[t].add_scaled(&ga, lambda);
            d_probs[t + 1].add_scaled(&gb, lambda);
        }
    }

    if let (true, Some(teacher)) = (terms.pf, teacher) {
        for t in 0..t_len - 1 {
            let (v, ga, gb) = pf_loss_vjp(
                &seq.student[t].probs,
                &seq.student[t + 1].probs,
                &teacher[t].probs,
                &teacher[t + 1].probs,
                cfg.pool,
            )?;
            b.pf += v;
            d_probs[t].add_scaled(&ga, lambda);
            d_probs[t + 1].add_scaled(&gb, lambda);
        }
    }

    let mut lstm_grads = None;
    let mut teacher_embedding = None;
    if let (true, Some(teacher)) = (terms.mf, teacher) {
        let params =
            lstm.ok_or_else(|| Error::validation("multi-frame term needs ConvLSTM parameters"))?;
        let s_grids: Vec<FeatureGrid> = seq
            .student
            .iter()
            .map(|o| pool_to_grid(&o.features, cfg.pool))
            .collect::<Result<_>>()?;
        let s_maps: Vec<SimilarityMap> = s_grids.iter().map(self_similarity).collect();
        let t_maps: Vec<SimilarityMap> = teacher
            .iter()
            .map(|o| pool_to_grid(&o.features, cfg.pool).map(|g| self_similarity(&g)))
            .collect::<Result<_>>()?;
        let e_s = encode_sequence(params, &s_maps)?;
        let e_t = encode_sequence(params, &t_maps)?;
        let (mf, g_t, g_s) = mf_loss_vjp(&e_t, &e_s)?;
        b.mf = mf;
        let mut d_et: Vec<f64> = g_t.iter().map(|g| lambda * g).collect();
        if let Some(margin) = cfg.collapse_margin {
            let (v, g) = anti_collapse_vjp(&e_t, margin);
            b.anti_collapse = v;
            d_et.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let d_es: Vec<f64> = g_s.iter().map(|g| lambda * g).collect();
        let (_, gs) = encode_sequence_vjp(params, &s_maps, &d_es)?;
        let (_, gt) = encode_sequence_vjp(params, &t_maps, &d_et)?;
        let mut grads = gs.params;
        let flat: Vec<f64> = grads
            .flatten()
            .iter()
            .zip(gt.params.flatten())
            .map(|(a, b)| a + b)
            .collect();
        grads.load_flat(&flat)?;
        for (t, gmap) in gs.maps.iter().enumerate() {
            let g = self_similarity_vjp(&s_grids[t], gmap)?;
            let shape = seq.student[t].features.shape();
            add_into(
                &mut d_feats[t],
                &pool_to_grid_vjp(&g, shape, cfg.pool)?,
                1.0,
            );
        }
        lstm_grads = Some(grads);
        teacher_embedding = Some(e_t);
    }

    b.total = b.recompose();
    Ok((
        b,
        ObjectiveGradients {
            probs: d_probs,
            features: d_feats,
            lstm: lstm_grads,
            teacher_embedding,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(k: usize, h: usize, w: usize, v: &[f64]) -> ProbMap {
        Grid::new(k, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn temporal_loss_hand_value() {
        let a = pm(2, 1, 1, &[0.8, 0.2]);
        let b = pm(2, 1, 1, &[0.6, 0.4]);
        let mask = OcclusionMask::uniform(1, 1, 1.0).unwrap();
        let v = temporal_loss(&a, &b, &FlowField::zeros(1, 1), &mask).unwrap();
        assert!((v - 0.08).abs() < 1e-15);
    }

    #[test]
    fn fully_occluded_pair_has_zero_temporal_loss() {
        let a = pm(2, 1, 2, &[0.9, 0.1, 0.1, 0.9]);
        let b = pm(2, 1, 2, &[0.1, 0.9, 0.9, 0.1]);
        let mask = OcclusionMask::uniform(1, 2, 0.0).unwrap();
        assert_eq!(
            temporal_loss(&a, &b, &FlowField::zeros(1, 2), &mask).unwrap(),
            0.0
        );
    }

    #[test]
    fn kl_hand_values() {
        let s = pm(2, 1, 1, &[0.5, 0.5]);
        let t = pm(2, 1, 1, &[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((pixel_distill(&s, &t).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.143841).abs() < 1e-6);
        let s = pm(2, 1, 1, &[1.0, 0.0]);
        let t = pm(2, 1, 1, &[0.5, 0.5]);
        assert!((pixel_distill(&s, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(pixel_distill(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Grid::filled(4, 2, 2, 0.25);
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert!((cross_entropy(&uniform, &labels).unwrap() - 4f64.ln()).abs() < 1e-15);
        let onehot = pm(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert_eq!(cross_entropy(&onehot, &labels).unwrap(), 0.0);
        let ignored = LabelMap::filled(1, 2, IGNORE);
        assert_eq!(cross_entropy(&onehot, &ignored).unwrap(), 0.0);
        let bad = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        assert!(matches!(
            cross_entropy(&onehot, &bad),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn mf_values() {
        let a = Embedding(vec![1.0, 0.0]);
        let z = Embedding(vec![0.0, 0.0]);
        assert_eq!(mf_loss(&a, &z).unwrap(), 1.0);
        assert_eq!(mf_loss(&a, &a).unwrap(), 0.0);
        assert!(mf_loss(&a, &Embedding(vec![0.0])).is_err());
    }

    #[test]
    fn pf_single_entry_difference() {
        // Pixels are the pooled rows. Student: (e1, e2) vs (e1, u) with
        // u = (0, 0.5, √0.75); teacher: (e1, e2) vs (e1, e3). Only a_11
        // differs, by 0.5.
        let r = 0.75f64.sqrt();
        let qs_t = pm(3, 1, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let qs_tk = pm(3, 1, 2, &[1.0, 0.0, 0.0, 0.5, 0.0, r]);
        let qt_tk = pm(3, 1, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let v = pf_loss(&qs_t, &qs_tk, &qs_t, &qt_tk, PoolSize::new(1, 2)).unwrap();
        assert!((v - 0.0625).abs() < 1e-15);
        assert_eq!(
            pf_loss(&qs_t, &qs_tk, &qs_t, &qs_tk, PoolSize::new(1, 2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn pairwise_single_entry_difference() {
        let fs = FeatureGrid::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ft = FeatureGrid::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        // off-diagonals differ by 1 each: (1 + 1) / 4
        assert_eq!(pairwise_distill(&fs, &ft).unwrap(), 0.5);
        assert_eq!(pairwise_distill(&fs, &fs).unwrap(), 0.0);
        // a zero teacher row zeroes exactly one entry of the map: 1² / 4
        let dead = FeatureGrid::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(pairwise_distill(&fs, &dead).unwrap(), 0.25);
    }

    #[test]
    fn anti_collapse_hinge() {
        let (v, g) = anti_collapse_vjp(&Embedding(vec![0.0; 4]), 0.1);
        assert_eq!(v, 0.1);
        assert!(g.iter().all(|&x| (x + 0.5).abs() < 1e-15));
        let (v, g) = anti_collapse_vjp(&Embedding(vec![0.3, 0.4]), 0.1);
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn term_flag_parsing() {
        assert_eq!(TermFlags::parse("none").unwrap(), TermFlags::NONE);
        assert_eq!(TermFlags::parse("all").unwrap(), TermFlags::ALL);
        let f = TermFlags::parse("tl, pf").unwrap();
        assert!(f.tl && f.pf && !f.sf && !f.mf);
        assert_eq!(f.label(), "pf,tl");
        assert!(TermFlags::parse("xx").is_err());
    }
}
