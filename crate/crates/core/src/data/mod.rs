//! Synthetic moving-shape clips with exact flow and sparse labels.

mod sampler;
mod store;

pub use sampler::{sample_triplet, Triplet};
pub use store::{
    clip_dirs, dataset_digest, load_clip, load_labeled_frames, load_split, read_manifest,
    save_clip, save_dataset, ClipManifest, LabeledFrame,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowwarp::FlowField;
use crate::metrics::LabelMap;
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
}

/// One moving object. `origin` is the top-left corner of its bounding box
/// at frame 0; it moves by `velocity` pixels per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: u8,
    pub size: usize,
    pub origin: (i64, i64),
    pub velocity: (i64, i64),
    pub color: [f64; 3],
}

impl SceneObject {
    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let ox = self.origin.0 + self.velocity.0 * t as i64;
        let oy = self.origin.1 + self.velocity.1 * t as i64;
        let (lx, ly) = (x as i64 - ox, y as i64 - oy);
        let s = self.size as i64;
        if lx < 0 || ly < 0 || lx >= s || ly >= s {
            return false;
        }
        match self.shape {
            Shape::Square => true,
            Shape::Disc => {
                let r = self.size as f64 / 2.0;
                let (cx, cy) = (lx as f64 + 0.5 - r, ly as f64 + 0.5 - r);
                cx * cx + cy * cy <= r * r
            }
        }
    }
}

/// Geometry and appearance of a clip. Later objects are drawn on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub background_class: u8,
    pub background_color: [f64; 3],
    pub objects: Vec<SceneObject>,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    /// Amplitude of a per-frame multiplicative brightness change.
    pub flicker: f64,
    /// Additive colour cast reached `len / 2` frames away from `anchor`.
    pub cast: [f64; 3],
    /// Frame without colour cast.
    pub anchor: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("scene canvas must be non-empty"));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::validation(format!(
                "scene needs 2..=255 classes, got {}",
                self.classes
            )));
        }
        if self.background_class as usize >= self.classes {
            return Err(Error::validation("background class out of range"));
        }
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.background_color) {
            return Err(Error::validation("background colour outside [0, 1]"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class as usize >= self.classes {
                return Err(Error::validation(format!(
                    "object {i} has class {} out of range",
                    o.class
                )));
            }
            if o.size == 0 {
                return Err(Error::validation(format!("object {i} has zero size")));
            }
            if !unit(&o.color) {
                return Err(Error::validation(format!(
                    "object {i} colour outside [0, 1]"
                )));
            }
        }
        if self.cast.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation("colour cast must be finite"));
        }
        if !(self.noise >= 0.0 && self.flicker >= 0.0) {
            return Err(Error::validation("noise and flicker must be non-negative"));
        }
        Ok(())
    }

    /// Index of the top-most object covering `(y, x)` at frame `t`.
    fn owner(&self, t: usize, y: usize, x: usize) -> Option<usize> {
        self.objects.iter().rposition(|o| o.covers(t, y, x))
    }

    /// Ground-truth labels of frame `t`.
    pub fn render_labels(&self, t: usize) -> LabelMap {
        let mut ids = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                ids.push(match self.owner(t, y, x) {
                    Some(i) => self.objects[i].class,
                    None => self.background_class,
                });
            }
        }
        LabelMap::new(self.height, self.width, ids).expect("sizes agree")
    }

    /// `M_{t→t+1}` when `forward`, otherwise `M_{t→t-1}`.
    fn flow_at(&self, t: usize, forward: bool) -> FlowField {
        let n = self.width * self.height;
        let (mut dx, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let sign = if forward { 1.0 } else { -1.0 };
        for y in 0..self.height {
            for x in 0..self.width {
                let (vx, vy) = match self.owner(t, y, x) {
                    Some(i) => self.objects[i].velocity,
                    None => (0, 0),
                };
                dx.push(sign * vx as f64);
                dy.push(sign * vy as f64);
            }
        }
        FlowField::new(self.height, self.width, dx, dy).expect("finite flow")
    }
}

/// Which frames of a generated clip carry labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPolicy {
    #[default]
    Middle,
    All,
}

impl LabelPolicy {
    fn indices(self, length: usize) -> Vec<usize> {
        match self {
            LabelPolicy::Middle => vec![length / 2],
            LabelPolicy::All => (0..length).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub seed: u64,
    pub classes: usize,
    pub frames: Vec<Image>,
    /// Sorted by frame index.
    pub labels: Vec<(usize, LabelMap)>,
    /// `flows[t] = M_{t→t+1}`.
    pub flows: Vec<FlowField>,
    /// `backward_flows[t] = M_{t+1→t}`.
    pub backward_flows: Vec<FlowField>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, Image::height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, Image::width)
    }

    pub fn label_at(&self, t: usize) -> Option<&LabelMap> {
        self.labels.iter().find(|(i, _)| *i == t).map(|(_, l)| l)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|(i, _)| *i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::validation(format!("clip {} has no frames", self.id)));
        };
        let shape = first.shape();
        if self.frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::validation(format!(
                "clip {} frames differ in shape",
                self.id
            )));
        }
        let (h, w) = (shape.1, shape.2);
        for flows in [&self.flows, &self.backward_flows] {
            if flows.len() + 1 != self.frames.len() {
                return Err(Error::validation(format!(
                    "clip {} has {} frames but {} flows",
                    self.id,
                    self.frames.len(),
                    flows.len()
                )));
            }
            if flows.iter().any(|f| f.height() != h || f.width() != w) {
                return Err(Error::validation(format!(
                    "clip {} flow shape mismatch",
                    self.id
                )));
            }
        }
        let mut prev = None;
        for (i, label) in &self.labels {
            if *i >= self.frames.len() || prev.is_some_and(|p| p >= *i) {
                return Err(Error::validation(format!(
                    "clip {} has invalid labelled index {i}",
                    self.id
                )));
            }
            if label.height() != h || label.width() != w {
                return Err(Error::validation(format!(
                    "clip {} label shape mismatch",
                    self.id
                )));
            }
            label.validate(self.classes)?;
            prev = Some(*i);
        }
        Ok(())
    }

    /// `M_{from→to}`, chaining consecutive flows for distant frames.
    pub fn flow_between(&self, from: usize, to: usize) -> Result<FlowField> {
        let n = self.len();
        if from >= n || to >= n {
            return Err(Error::validation(format!(
                "frame pair ({from}, {to}) outside clip {} of length {n}",
                self.id
            )));
        }
        if from == to {
            return Ok(FlowField::zeros(self.height(), self.width()));
        }
        if from < to {
            let mut acc = self.flows[from].clone();
            for t in from + 1..to {
                acc = acc.then(&self.flows[t])?;
            }
            Ok(acc)
        } else {
            let mut acc = self.backward_flows[from - 1].clone();
            for t in (to..from - 1).rev() {
                acc = acc.then(&self.backward_flows[t])?;
            }
            Ok(acc)
        }
    }
}

/// Renders `length` frames of `spec`. Pixel values are quantised to 8 bits
/// so that PNG storage is lossless.
pub fn generate_clip(spec: &SceneSpec, length: usize, seed: u64) -> Result<VideoClip> {
    generate_clip_with(spec, length, seed, LabelPolicy::Middle)
}

pub fn generate_clip_with(
    spec: &SceneSpec,
    length: usize,
    seed: u64,
    policy: LabelPolicy,
) -> Result<VideoClip> {
    spec.validate()?;
    if length < 3 {
        return Err(Error::validation(format!("clip length {length} below 3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(length);
    let half = (length / 2).max(1) as f64;
    for t in 0..length {
        let gain = 1.0 + spec.flicker * rng.gen_range(-1.0..=1.0);
        let drift = (t as f64 - spec.anchor as f64).abs() / half;
        let mut frame = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let base = match spec.owner(t, y, x) {
                    Some(i) => spec.objects[i].color,
                    None => spec.background_color,
                };
                for (c, b) in base.iter().enumerate() {
                    let v =
                        b * gain + drift * spec.cast[c] + spec.noise * rng.gen_range(-1.0..=1.0);
                    *frame.at_mut(c, y, x) = quantize(v);
                }
            }
        }
        frames.push(frame);
    }
    let labels = policy
        .indices(length)
        .into_iter()
        .map(|t| (t, spec.render_labels(t)))
        .collect();
    let clip = VideoClip {
        id: format!("clip_{seed:016x}"),
        seed,
        classes: spec.classes,
        frames,
        labels,
        flows: (0..length - 1).map(|t| spec.flow_at(t, true)).collect(),
        backward_flows: (1..length).map(|t| spec.flow_at(t, false)).collect(),
    };
    clip.validate()?;
    Ok(clip)
}

pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Parameters of the random scene distribution used for datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub clip_length: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_speed: i64,
    pub noise: f64,
    pub flicker: f64,
    /// Per-object jitter of the class colour.
    pub color_jitter: f64,
    /// Magnitude of the per-clip colour cast that grows away from the
    /// labelled middle frame.
    pub drift: f64,
    pub val_labels: LabelPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            classes: 4,
            clip_length: 11,
            train_clips: 200,
            val_clips: 40,
            min_objects: 2,
            max_objects: 4,
            min_size: 6,
            max_size: 12,
            max_speed: 2,
            noise: 0.15,
            flicker: 0.1,
            color_jitter: 0.12,
            drift: 0.2,
            val_labels: LabelPolicy::Middle,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::validation(format!("data.{field}: {why}")));
        if self.width == 0 || self.height == 0 {
            return bad("width", "canvas must be non-empty");
        }
        if self.classes < 2 || self.classes > 255 {
            return bad("classes", "must lie in 2..=255");
        }
        if self.clip_length < 3 {
            return bad("clip_length", "must be at least 3");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects", "exceeds max_objects");
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad("min_size", "must be positive and at most max_size");
        }
        if self.max_size > self.width.min(self.height) {
            return bad("max_size", "larger than the canvas");
        }
        if self.max_speed < 0 {
            return bad("max_speed", "must be non-negative");
        }
        for (name, v) in [
            ("noise", self.noise),
            ("flicker", self.flicker),
            ("color_jitter", self.color_jitter),
            ("drift", self.drift),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Base colour of class `k`; class 0 is the background.
    pub fn class_color(&self, k: usize) -> [f64; 3] {
        const PALETTE: [[f64; 3]; 8] = [
            [0.45, 0.45, 0.45],
            [0.80, 0.25, 0.25],
            [0.25, 0.70, 0.30],
            [0.25, 0.35, 0.80],
            [0.80, 0.75, 0.25],
            [0.70, 0.30, 0.75],
            [0.25, 0.75, 0.75],
            [0.90, 0.55, 0.20],
        ];
        if k < PALETTE.len() {
            PALETTE[k]
        } else {
            // deterministic spread for large class counts
            let h = (k as f64 * 0.618_033_988_75).fract();
            [
                0.3 + 0.5 * h,
                0.3 + 0.5 * (1.0 - h),
                0.3 + 0.5 * (2.0 * h).fract(),
            ]
        }
    }

    /// Draws a random scene whose objects sit inside the canvas at the
    /// middle frame of the clip.
    pub fn random_scene(&self, rng: &mut impl Rng) -> SceneSpec {
        let count = rng.gen_range(self.min_objects..=self.max_objects);
        let mid = (self.clip_length / 2) as i64;
        let objects = (0..count)
            .map(|_| {
                let class = rng.gen_range(1..self.classes) as u8;
                let size = rng.gen_range(self.min_size..=self.max_size);
                let velocity = (
                    rng.gen_range(-self.max_speed..=self.max_speed),
                    rng.gen_range(-self.max_speed..=self.max_speed),
                );
                let mx = rng.gen_range(0..=(self.width - size) as i64);
                let my = rng.gen_range(0..=(self.height - size) as i64);
                let base = self.class_color(class as usize);
                let color = base
                    .map(|c| (c + self.color_jitter * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0));
                SceneObject {
                    shape: if rng.gen_bool(0.5) {
                        Shape::Square
                    } else {
                        Shape::Disc
                    },
                    class,
                    size,
                    origin: (mx - velocity.0 * mid, my - velocity.1 * mid),
                    velocity,
                    color,
                }
            })
            .collect();
        // random direction on the sphere, scaled to the drift magnitude
        let mut dir = [0.0f64; 3];
        let dist = rand_distr::StandardNormal;
        dir.iter_mut().for_each(|d| *d = rng.sample::<f64, _>(dist));
        let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
        SceneSpec {
            width: self.width,
            height: self.height,
            classes: self.classes,
            background_class: 0,
            background_color: self.class_color(0),
            objects,
            noise: self.noise,
            flicker: self.flicker,
            cast: dir.map(|d| self.drift * d / len),
            anchor: self.clip_length / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

/// Generates train and validation clips; every clip gets its own seed
/// drawn from `seed`, so any clip can be regenerated on its own.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |count: usize, prefix: &str, policy: LabelPolicy| -> Result<Vec<VideoClip>> {
        (0..count)
            .map(|i| {
                let clip_seed: u64 = master.gen();
                let mut scene_rng = ChaCha8Rng::seed_from_u64(clip_seed);
                let spec = cfg.random_scene(&mut scene_rng);
                let mut clip = generate_clip_with(&spec, cfg.clip_length, clip_seed, policy)?;
                clip.id = format!("{prefix}_{i:04}");
                Ok(clip)
            })
            .collect()
    };
    let train = make(cfg.train_clips, "train", LabelPolicy::Middle)?;
    let val = make(cfg.val_clips, "val", cfg.val_labels)?;
    Ok(Dataset { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowwarp::warp_labels_nearest;

    fn square(velocity: (i64, i64)) -> SceneSpec {
        SceneSpec {
            width: 12,
            height: 10,
            classes: 3,
            background_class: 0,
            background_color: [0.2, 0.2, 0.2],
            objects: vec![SceneObject {
                shape: Shape::Square,
                class: 1,
                size: 4,
                origin: (3, 3),
                velocity,
                color: [0.9, 0.1, 0.1],
            }],
            noise: 0.05,
            flicker: 0.05,
            cast: [0.0; 3],
            anchor: 0,
        }
    }

    #[test]
    fn static_square_has_zero_flow_and_constant_labels() {
        let spec = square((0, 0));
        let clip = generate_clip_with(&spec, 5, 3, LabelPolicy::All).unwrap();
        for f in clip.flows.iter().chain(&clip.backward_flows) {
            assert!(f.dx().iter().chain(f.dy()).all(|&v| v == 0.0));
        }
        let first = &clip.labels[0].1;
        assert!(clip.labels.iter().all(|(_, l)| l == first));
    }

    #[test]
    fn moving_square_shifts_labels_and_flow() {
        let spec = square((1, 0));
        let clip = generate_clip_with(&spec, 4, 3, LabelPolicy::All).unwrap();
        let (l0, l1) = (&clip.labels[0].1, &clip.labels[1].1);
        for y in 0..10 {
            for x in 0..12 {
                let inside = (3..7).contains(&y) && (3..7).contains(&x);
                assert_eq!(l0.at(y, x), u8::from(inside));
                assert_eq!(
                    clip.flows[0].at(y, x),
                    (if inside { 1.0 } else { 0.0 }, 0.0)
                );
                // geometric shift oracle
                if x >= 1 {
                    assert_eq!(l1.at(y, x), l0.at(y, x - 1));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_quantised() {
        let cfg = DataConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = cfg.random_scene(&mut rng);
        let a = generate_clip(&spec, 11, 9).unwrap();
        let b = generate_clip(&spec, 11, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labeled_indices(), vec![5]);
        for v in a.frames[0].data() {
            assert_eq!(quantize(*v), *v);
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = square((0, 0));
        spec.classes = 0;
        assert!(matches!(
            generate_clip(&spec, 5, 0),
            Err(Error::Validation(_))
        ));
        assert!(generate_clip(&square((0, 0)), 0, 0).is_err());
    }

    #[test]
    fn generated_flow_is_exact_on_visible_pixels() {
        let cfg = DataConfig {
            val_labels: LabelPolicy::All,
            val_clips: 6,
            train_clips: 0,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&cfg, 11).unwrap();
        for clip in &ds.val {
            for t in 0..clip.len() - 1 {
                let (lt, lt1) = (clip.label_at(t).unwrap(), clip.label_at(t + 1).unwrap());
                let warped = warp_labels_nearest(lt1, &clip.flows[t]).unwrap();
                let agree = warped
                    .ids()
                    .iter()
                    .zip(lt.ids())
                    .filter(|(a, b)| a == b)
                    .count();
                let frac = agree as f64 / lt.ids().len() as f64;
                assert!(frac >= 0.9, "{} pair {t}: {frac}", clip.id);
            }
        }
    }

    #[test]
    fn chained_flow_matches_composition_for_constant_velocity() {
        let spec = square((1, -1));
        let clip = generate_clip(&spec, 6, 0).unwrap();
        let chained = clip.flow_between(0, 2).unwrap();
        // a pixel of the square at frame 0 travels 2 steps
        assert_eq!(chained.at(4, 4), (2.0, -2.0));
        assert_eq!(chained.at(0, 0), (0.0, 0.0));
        let back = clip.flow_between(2, 0).unwrap();
        assert_eq!(back.at(2, 6), (-2.0, 2.0));
        assert_eq!(clip.flow_between(3, 3).unwrap(), FlowField::zeros(10, 12));
        assert!(clip.flow_between(0, 6).is_err());
    }
}
