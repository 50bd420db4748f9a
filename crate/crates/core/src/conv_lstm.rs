//! Peephole ConvLSTM that folds a sequence of self-similarity maps into a
//! single embedding, with backpropagation through time.
//!
//! Per step, with `A` the one-channel input map:
//!
//! ```text
//! i = σ(W_ai*A + W_hi*H + w_ei∘E_prev + b_i)
//! f = σ(W_af*A + W_hf*H + w_ef∘E_prev + b_f)
//! E = f∘E_prev + i∘tanh(W_ae*A + W_he*H + b_e)
//! o = σ(W_ao*A + W_ho*H + w_eo∘E + b_o)
//! H = o∘tanh(E)
//! ```
//!
//! The input and hidden convolutions of all four gates are one convolution
//! over the channel concatenation `[A; H]` with output channels ordered
//! `i, f, e, o`. Peephole weights hold one value per hidden channel and are
//! broadcast over space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvCache};
use crate::similarity::SimilarityMap;
use crate::tensor::Grid;

/// Gate slots within the fused convolution output.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_E: usize = 2;
const GATE_O: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    hidden: usize,
    /// `(1 + hidden) → 4·hidden` convolution carrying `W_a·`, `W_h·` and `b_·`.
    pub conv: Conv2d,
    pub peep_i: Vec<f64>,
    pub peep_f: Vec<f64>,
    pub peep_o: Vec<f64>,
}

impl ConvLstmParams {
    /// All-zero parameters: the collapse point of the encoder.
    pub fn zeros(hidden: usize, kernel: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::validation(
                "ConvLSTM needs at least one hidden channel",
            ));
        }
        if kernel % 2 == 0 {
            return Err(Error::validation(format!(
                "ConvLSTM kernel {kernel} must be odd"
            )));
        }
        Ok(Self {
            hidden,
            conv: Conv2d::zeros(1 + hidden, 4 * hidden, kernel),
            peep_i: vec![0.0; hidden],
            peep_f: vec![0.0; hidden],
            peep_o: vec![0.0; hidden],
        })
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn random(hidden: usize, kernel: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(hidden, kernel)?;
        p.for_each_mut(|v| *v = rng.gen_range(-scale..=scale));
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn kernel(&self) -> usize {
        self.conv.kernel
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 3 * self.hidden
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden, self.conv.kernel).expect("shape already validated")
    }

    fn slices(&self) -> [&[f64]; 5] {
        [
            &self.conv.weight,
            &self.conv.bias,
            &self.peep_i,
            &self.peep_f,
            &self.peep_o,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.peep_i,
            &mut self.peep_f,
            &mut self.peep_o,
        ]
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(&mut f);
        }
    }

    /// Parameters in a fixed order: weights, biases, `w_ei`, `w_ef`, `w_eo`.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "ConvLSTM expects {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn clip_in_place(&mut self, lo: f64, hi: f64) -> Result<()> {
        if !(lo < hi) {
            return Err(Error::validation(format!(
                "clip range [{lo}, {hi}] is empty"
            )));
        }
        self.for_each_mut(|v| *v = v.clamp(lo, hi));
        Ok(())
    }
}

/// Returns a copy of `params` with every entry clamped into `[lo, hi]`.
pub fn clip_weights(params: &ConvLstmParams, lo: f64, hi: f64) -> Result<ConvLstmParams> {
    let mut out = params.clone();
    out.clip_in_place(lo, hi)?;
    Ok(out)
}

/// Memory `E` and hidden state `H`, each `hidden × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub memory: Grid,
    pub hidden: Grid,
}

impl RecurrentState {
    pub fn zeros(hidden: usize, height: usize, width: usize) -> Self {
        Self {
            memory: Grid::zeros(hidden, height, width),
            hidden: Grid::zeros(hidden, height, width),
        }
    }
}

/// The pooled multi-frame embedding, length `hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct StepCache {
    conv: ConvCache,
    prev_memory: Grid,
    i: Grid,
    f: Grid,
    g: Grid,
    o: Grid,
    memory: Grid,
    tanh_memory: Grid,
}

fn concat_input(input: &Grid, hidden: &Grid) -> Grid {
    let mut data = Vec::with_capacity(input.data().len() + hidden.data().len());
    data.extend_from_slice(input.data());
    data.extend_from_slice(hidden.data());
    Grid::new(
        input.channels() + hidden.channels(),
        input.height(),
        input.width(),
        data,
    )
    .expect("channel sizes add up")
}

fn step_cached(
    params: &ConvLstmParams,
    state: &RecurrentState,
    input: &Grid,
) -> Result<(RecurrentState, StepCache)> {
    let (hc, h, w) = state.memory.shape();
    if hc != params.hidden || state.hidden.shape() != state.memory.shape() {
        return Err(Error::contract(
            "recurrent state does not match the parameters",
        ));
    }
    if input.channels() != 1 || (input.height(), input.width()) != (h, w) {
        return Err(Error::contract(format!(
            "ConvLSTM input is {:?}, state grid is {h}x{w}",
            input.shape()
        )));
    }
    let (z, conv) = params.conv.forward(&concat_input(input, &state.hidden));
    let n = h * w;
    let mut i = Grid::zeros(hc, h, w);
    let mut f = Grid::zeros(hc, h, w);
    let mut g = Grid::zeros(hc, h, w);
    let mut o = Grid::zeros(hc, h, w);
    let mut memory = Grid::zeros(hc, h, w);
    let mut tanh_memory = Grid::zeros(hc, h, w);
    let mut hidden = Grid::zeros(hc, h, w);
    for c in 0..hc {
        let zi = z.plane(GATE_I * hc + c);
        let zf = z.plane(GATE_F * hc + c);
        let ze = z.plane(GATE_E * hc + c);
        let zo = z.plane(GATE_O * hc + c);
        let prev = state.memory.plane(c);
        for p in 0..n {
            let iv = sigmoid(zi[p] + params.peep_i[c] * prev[p]);
            let fv = sigmoid(zf[p] + params.peep_f[c] * prev[p]);
            let gv = ze[p].tanh();
            let ev = fv * prev[p] + iv * gv;
            let ov = sigmoid(zo[p] + params.peep_o[c] * ev);
            let te = ev.tanh();
            i.plane_mut(c)[p] = iv;
            f.plane_mut(c)[p] = fv;
            g.plane_mut(c)[p] = gv;
            o.plane_mut(c)[p] = ov;
            memory.plane_mut(c)[p] = ev;
            tanh_memory.plane_mut(c)[p] = te;
            hidden.plane_mut(c)[p] = ov * te;
        }
    }
    let next = RecurrentState {
        memory: memory.clone(),
        hidden,
    };
    Ok((
        next,
        StepCache {
            conv,
            prev_memory: state.memory.clone(),
            i,
            f,
            g,
            o,
            memory,
            tanh_memory,
        },
    ))
}

/// One recurrence step on a one-channel input grid.
pub fn step(
    params: &ConvLstmParams,
    state: &RecurrentState,
    input: &Grid,
) -> Result<RecurrentState> {
    step_cached(params, state, input).map(|(s, _)| s)
}

fn spatial_mean(memory: &Grid) -> Embedding {
    let n = memory.pixels() as f64;
    Embedding(
        (0..memory.channels())
            .map(|c| memory.plane(c).iter().sum::<f64>() / n)
            .collect(),
    )
}

fn check_sequence(maps: &[SimilarityMap]) -> Result<(usize, usize)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::validation("cannot encode an empty sequence"))?;
    let shape = (first.rows(), first.cols());
    if maps.iter().any(|m| (m.rows(), m.cols()) != shape) {
        return Err(Error::contract("sequence maps differ in shape"));
    }
    Ok(shape)
}

/// Runs the recurrence from a zero state and returns the spatial mean of
/// the final memory.
pub fn encode_sequence(params: &ConvLstmParams, maps: &[SimilarityMap]) -> Result<Embedding> {
    let (h, w) = check_sequence(maps)?;
    let mut state = RecurrentState::zeros(params.hidden, h, w);
    for m in maps {
        state = step(params, &state, &m.to_grid())?;
    }
    Ok(spatial_mean(&state.memory))
}

/// Gradients of a scalar function of [`encode_sequence`]'s output.
pub struct EncodeGradients {
    pub params: ConvLstmParams,
    /// One gradient per input map, shaped like the map.
    pub maps: Vec<SimilarityMap>,
}

/// Backpropagation through time for [`encode_sequence`], given the
/// gradient of the objective w.r.t. the embedding.
pub fn encode_sequence_vjp(
    params: &ConvLstmParams,
    maps: &[SimilarityMap],
    grad_embedding: &[f64],
) -> Result<(Embedding, EncodeGradients)> {
    let (h, w) = check_sequence(maps)?;
    if grad_embedding.len() != params.hidden {
        return Err(Error::contract("embedding gradient has the wrong length"));
    }
    let mut state = RecurrentState::zeros(params.hidden, h, w);
    let mut caches = Vec::with_capacity(maps.len());
    for m in maps {
        let (next, cache) = step_cached(params, &state, &m.to_grid())?;
        caches.push(cache);
        state = next;
    }
    let embedding = spatial_mean(&state.memory);

    let hc = params.hidden;
    let n = h * w;
    let mut grads = params.zeros_like();
    let mut grad_maps = vec![None; maps.len()];
    let mut d_memory = Grid::from_fn(hc, h, w, |c, _, _| grad_embedding[c] / n as f64);
    let mut d_hidden = Grid::zeros(hc, h, w);
    for (t, cache) in caches.iter().enumerate().rev() {
        let mut dz = Grid::zeros(4 * hc, h, w);
        let mut d_prev_memory = Grid::zeros(hc, h, w);
        for c in 0..hc {
            let (wi, wf, wo) = (params.peep_i[c], params.peep_f[c], params.peep_o[c]);
            let (mut gwi, mut gwf, mut gwo) = (0.0, 0.0, 0.0);
            for p in 0..n {
                let iv = cache.i.plane(c)[p];
                let fv = cache.f.plane(c)[p];
                let gv = cache.g.plane(c)[p];
                let ov = cache.o.plane(c)[p];
                let ev = cache.memory.plane(c)[p];
                let te = cache.tanh_memory.plane(c)[p];
                let prev = cache.prev_memory.plane(c)[p];
                let dh = d_hidden.plane(c)[p];

                let dzo = dh * te * ov * (1.0 - ov);
                let de = d_memory.plane(c)[p] + dh * ov * (1.0 - te * te) + dzo * wo;
                gwo += dzo * ev;

                let dzi = de * gv * iv * (1.0 - iv);
                let dzf = de * prev * fv * (1.0 - fv);
                let dze = de * iv * (1.0 - gv * gv);
                gwi += dzi * prev;
                gwf += dzf * prev;

                d_prev_memory.plane_mut(c)[p] = de * fv + dzi * wi + dzf * wf;
                dz.plane_mut(GATE_I * hc + c)[p] = dzi;
                dz.plane_mut(GATE_F * hc + c)[p] = dzf;
                dz.plane_mut(GATE_E * hc + c)[p] = dze;
                dz.plane_mut(GATE_O * hc + c)[p] = dzo;
            }
            grads.peep_i[c] += gwi;
            grads.peep_f[c] += gwf;
            grads.peep_o[c] += gwo;
        }
        let d_input = params
            .conv
            .backward(
                &cache.conv,
                &dz,
                &mut grads.conv.weight,
                &mut grads.conv.bias,
                true,
            )
            .expect("input gradient requested");
        let mut d_input = d_input.into_data();
        let d_h: Vec<f64> = d_input.split_off(n);
        grad_maps[t] = Some(SimilarityMap::new(h, w, d_input)?);
        d_hidden = Grid::new(hc, h, w, d_h)?;
        d_memory = d_prev_memory;
    }
    Ok((
        embedding,
        EncodeGradients {
            params: grads,
            maps: grad_maps.into_iter().map(|m| m.expect("filled")).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state_is_collapse_point() {
        let params = ConvLstmParams::zeros(3, 3).unwrap();
        let state = RecurrentState::zeros(3, 2, 2);
        let input = Grid::filled(1, 2, 2, 0.8);
        let (next, cache) = step_cached(&params, &state, &input).unwrap();
        assert!(cache.i.data().iter().all(|&v| v == 0.5));
        assert!(cache.f.data().iter().all(|&v| v == 0.5));
        assert!(cache.o.data().iter().all(|&v| v == 0.5));
        assert!(next.memory.data().iter().all(|&v| v == 0.0));
        assert!(next.hidden.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_halve_memory() {
        let params = ConvLstmParams::zeros(2, 3).unwrap();
        let e = 0.9;
        let state = RecurrentState {
            memory: Grid::filled(2, 2, 2, e),
            hidden: Grid::zeros(2, 2, 2),
        };
        let next = step(&params, &state, &Grid::filled(1, 2, 2, -0.3)).unwrap();
        for (&m, &h) in next.memory.data().iter().zip(next.hidden.data()) {
            assert!((m - 0.5 * e).abs() < 1e-15);
            assert!((h - 0.5 * (0.5 * e).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let params = ConvLstmParams::zeros(2, 3).unwrap();
        assert!(matches!(
            encode_sequence(&params, &[]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn mismatched_input_is_contract_error() {
        let params = ConvLstmParams::zeros(2, 3).unwrap();
        let state = RecurrentState::zeros(2, 3, 3);
        assert!(matches!(
            step(&params, &state, &Grid::zeros(1, 2, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clip_range_is_validated_and_applied() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ConvLstmParams::random(2, 3, 0.5, &mut rng).unwrap();
        assert_eq!(clip_weights(&params, -1.0, 1.0).unwrap(), params);
        params.conv.weight[3] = 5.0;
        params.peep_o[1] = -7.0;
        let clipped = clip_weights(&params, -1.0, 1.0).unwrap();
        assert_eq!(clipped.conv.weight[3], 1.0);
        assert_eq!(clipped.peep_o[1], -1.0);
        for (a, b) in params.iter().zip(clipped.iter()) {
            assert_eq!(b, a.clamp(-1.0, 1.0));
        }
        assert!(matches!(
            clip_weights(&params, 1.0, 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ConvLstmParams::random(3, 3, 0.3, &mut rng).unwrap();
        let mut other = params.zeros_like();
        other.load_flat(&params.flatten()).unwrap();
        assert_eq!(other, params);
    }
}
