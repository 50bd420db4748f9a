//! Segmentation-network and motion-estimator interfaces, with the small
//! reference CNN used for both teacher and student roles.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::flowwarp::FlowField;
use crate::metrics::LabelMap;
use crate::nn::{self, Conv2d, ConvCache};
use crate::tensor::{Grid, Image, ProbMap};

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    /// Activations of the last convolutional block before the classifier.
    pub features: Grid,
    pub probs: ProbMap,
}

/// A per-frame segmentation network.
pub trait SegmentationNet {
    fn classes(&self) -> usize;

    fn param_count(&self) -> usize;

    fn forward(&self, image: &Image) -> Result<NetOutput>;

    /// Hard per-pixel prediction.
    fn predict(&self, image: &Image) -> Result<LabelMap> {
        let out = self.forward(image)?;
        LabelMap::new(image.height(), image.width(), out.probs.argmax())
    }
}

/// Source of optical flow between two frames of a clip: returns
/// `M_{from→to}`.
pub trait MotionEstimator {
    fn flow_between(&self, from: usize, to: usize) -> Result<FlowField>;
}

/// Channel widths of the 3×3 convolution stack; a 1×1 classifier follows.
///
/// With three or more widths the first layer runs at full resolution, the
/// inner layers after a 2× average pool, and the last layer after 2×
/// nearest upsampling back to full resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl NetConfig {
    pub fn student(classes: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 16, 16],
            classes,
        }
    }

    pub fn teacher(classes: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![24, 48, 48, 24, 24],
            classes,
        }
    }

    /// Number of convolution layers including the classifier.
    pub fn depth(&self) -> usize {
        self.widths.len() + 1
    }

    fn uses_half_resolution(&self) -> bool {
        self.widths.len() >= 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::validation("network depth must be at least 2"));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::validation(format!(
                "class count {} outside 2..=255",
                self.classes
            )));
        }
        if self.in_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::validation("channel widths must be positive"));
        }
        Ok(())
    }
}

/// Activations kept by [`TinyNet::forward_traced`] for the backward pass.
pub struct ForwardTrace {
    caches: Vec<ConvCache>,
    acts: Vec<Grid>,
    head: ConvCache,
    output: NetOutput,
}

impl ForwardTrace {
    pub fn output(&self) -> &NetOutput {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet {
    config: NetConfig,
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl TinyNet {
    /// He-initialised network; biases start at zero.
    pub fn new(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for conv in net.layers.iter_mut() {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            conv.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        let std = (1.0 / net.head.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        net.head
            .weight
            .iter_mut()
            .for_each(|w| *w = normal.sample(rng));
        Ok(net)
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.widths.len());
        let mut c_in = config.in_channels;
        for &w in &config.widths {
            layers.push(Conv2d::zeros(c_in, w, 3));
            c_in = w;
        }
        let head = Conv2d::zeros(c_in, config.classes, 1);
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for conv in self.layers.iter().chain(std::iter::once(&self.head)) {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for conv in self
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
        {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = SegmentationNet::param_count(self);
        if flat.len() != expected {
            return Err(Error::contract(format!(
                "network expects {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels() != self.config.in_channels {
            return Err(Error::contract(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                image.channels()
            )));
        }
        if self.config.uses_half_resolution() && (image.height() % 2 != 0 || image.width() % 2 != 0)
        {
            return Err(Error::contract("frame height and width must be even"));
        }
        Ok(())
    }

    fn is_pooled_after(&self, layer: usize) -> bool {
        self.config.uses_half_resolution() && layer == 0
    }

    fn is_upsampled_before(&self, layer: usize) -> bool {
        self.config.uses_half_resolution() && layer + 1 == self.layers.len()
    }

    /// Forward pass that keeps everything [`TinyNet::backward`] needs.
    pub fn forward_traced(&self, image: &Image) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Grid> = Vec::with_capacity(self.layers.len());
        for (l, conv) in self.layers.iter().enumerate() {
            let input = match acts.last() {
                None => image.clone(),
                Some(prev) if self.is_pooled_after(l - 1) => nn::avg_pool2(prev),
                Some(prev) if self.is_upsampled_before(l) => nn::upsample2(prev),
                Some(prev) => prev.clone(),
            };
            let (mut y, cache) = conv.forward(&input);
            nn::relu(&mut y);
            caches.push(cache);
            acts.push(y);
        }
        let features = acts.last().expect("at least one layer").clone();
        let (logits, head) = self.head.forward(&features);
        let probs = nn::softmax_channels(&logits);
        Ok(ForwardTrace {
            caches,
            acts,
            head,
            output: NetOutput { features, probs },
        })
    }

    /// Accumulates parameter gradients into `grads` given the gradients of
    /// the objective w.r.t. the probabilities and (optionally) the features.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_probs: &Grid,
        grad_features: Option<&Grid>,
        grads: &mut TinyNet,
    ) -> Result<()> {
        if grad_probs.shape() != trace.output.probs.shape() {
            return Err(Error::contract("probability gradient has the wrong shape"));
        }
        let d_logits = nn::softmax_backward(&trace.output.probs, grad_probs);
        let mut d = self
            .head
            .backward(
                &trace.head,
                &d_logits,
                &mut grads.head.weight,
                &mut grads.head.bias,
                true,
            )
            .expect("input gradient requested");
        if let Some(gf) = grad_features {
            if gf.shape() != d.shape() {
                return Err(Error::contract("feature gradient has the wrong shape"));
            }
            d.add_scaled(gf, 1.0);
        }
        for l in (0..self.layers.len()).rev() {
            nn::relu_backward(&trace.acts[l], &mut d);
            let g = &mut grads.layers[l];
            let d_in =
                self.layers[l].backward(&trace.caches[l], &d, &mut g.weight, &mut g.bias, l > 0);
            let Some(d_in) = d_in else { break };
            d = if self.is_upsampled_before(l) {
                nn::upsample2_backward(&d_in)
            } else if self.is_pooled_after(l - 1) {
                nn::avg_pool2_backward(&d_in)
            } else {
                d_in
            };
        }
        Ok(())
    }
}

impl SegmentationNet for TinyNet {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(Conv2d::param_count).sum::<usize>() + self.head.param_count()
    }

    fn forward(&self, image: &Image) -> Result<NetOutput> {
        self.forward_traced(image).map(|t| t.output)
    }
}

/// Builds a reference network with random initialisation.
pub fn tiny_net(config: NetConfig, rng: &mut impl Rng) -> Result<TinyNet> {
    TinyNet::new(config, rng)
}

/// Motion estimator answering from a clip's exact ground-truth flow.
pub struct GroundTruthFlow<'a> {
    clip: &'a VideoClip,
}

impl MotionEstimator for GroundTruthFlow<'_> {
    fn flow_between(&self, from: usize, to: usize) -> Result<FlowField> {
        self.clip.flow_between(from, to)
    }
}

pub fn ground_truth_flow_estimator(clip: &VideoClip) -> GroundTruthFlow<'_> {
    GroundTruthFlow { clip }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_image_gives_valid_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = tiny_net(NetConfig::student(4), &mut rng).unwrap();
        let out = net.forward(&Grid::zeros(3, 8, 8)).unwrap();
        assert_eq!(out.probs.shape(), (4, 8, 8));
        out.probs.check_probabilities(1e-6).unwrap();
        assert_eq!(out.features.shape(), (16, 8, 8));
    }

    #[test]
    fn teacher_has_about_four_times_the_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = tiny_net(NetConfig::student(4), &mut rng).unwrap();
        let t = tiny_net(NetConfig::teacher(4), &mut rng).unwrap();
        let (ps, pt) = (s.param_count(), t.param_count());
        // independent count: Σ (c_in·9 + 1)·c_out over the 3×3 stack, plus the head
        let count = |cfg: &NetConfig| {
            let mut c_in = cfg.in_channels;
            let mut total = 0;
            for &w in &cfg.widths {
                total += (c_in * 9 + 1) * w;
                c_in = w;
            }
            total + (c_in + 1) * cfg.classes
        };
        assert_eq!(ps, count(&NetConfig::student(4)));
        assert_eq!(pt, count(&NetConfig::teacher(4)));
        assert!(pt > 3 * ps, "teacher {pt} vs student {ps}");
        assert_eq!(NetConfig::student(4).depth(), 5);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = NetConfig {
            in_channels: 3,
            widths: vec![],
            classes: 4,
        };
        assert!(matches!(TinyNet::zeros(bad), Err(Error::Validation(_))));
        let bad = NetConfig {
            classes: 1,
            ..NetConfig::student(4)
        };
        assert!(TinyNet::zeros(bad).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = NetConfig {
            in_channels: 2,
            widths: vec![3, 4, 3],
            classes: 3,
        };
        // random biases keep pre-activations away from the ReLU kink
        let mut net = tiny_net(cfg, &mut rng).unwrap();
        let flat: Vec<f64> = net
            .flatten()
            .iter()
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        net.load_flat(&flat).unwrap();
        let image = Grid::from_fn(2, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let gp = Grid::from_fn(3, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let gf = Grid::from_fn(3, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let objective = |net: &TinyNet| {
            let o = net.forward(&image).unwrap();
            let a: f64 = o
                .probs
                .data()
                .iter()
                .zip(gp.data())
                .map(|(x, y)| x * y)
                .sum();
            let b: f64 = o
                .features
                .data()
                .iter()
                .zip(gf.data())
                .map(|(x, y)| x * y)
                .sum();
            a + b
        };
        let trace = net.forward_traced(&image).unwrap();
        let mut grads = net.zeros_like();
        net.backward(&trace, &gp, Some(&gf), &mut grads).unwrap();
        let analytic = grads.flatten();
        let flat = net.flatten();
        let h = 1e-6;
        let mut bad = Vec::new();
        for i in 0..flat.len() {
            let mut p = net.clone();
            let mut v = flat.clone();
            v[i] += h;
            p.load_flat(&v).unwrap();
            let mut m = net.clone();
            v[i] -= 2.0 * h;
            m.load_flat(&v).unwrap();
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            if (fd - analytic[i]).abs() > 1e-6 * (1.0 + fd.abs()) {
                bad.push((i, fd, analytic[i]));
            }
        }
        assert!(bad.is_empty(), "{bad:?}");
    }
}
